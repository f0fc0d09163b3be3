//! Evaluation: attack success rate, clean accuracy, isolation precision, and
//! loss-curve summaries.
//!
//! This is the only module allowed to read ground-truth poison flags; a test
//! below scans the other modules' sources to keep it that way.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::abl::{IsolationResult, LossTrace};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;

/// Per-epoch mean losses over ground-truth clean vs poisoned examples.
/// A group with no members contributes 0.0 (JSON has no NaN).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub mean_clean: Vec<f64>,
    pub mean_backdoor: Vec<f64>,
}

/// Evaluation summary of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub asr: f64,
    pub clean_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub isolation_precision: Option<f64>,
    pub loss_curves: LossCurves,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_echo: Option<serde_json::Value>,
}

impl Report {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Report> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("report: {e}")))
    }
}

/// Argmax with ties broken by the lowest class index.
pub fn predict(net: &Network, image: &crate::data::Image) -> Result<usize> {
    let logits = net.forward(&[image])?;
    Ok(argmax(&logits[0]))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn predictions(net: &Network, data: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.examples().chunks(512) {
        let images: Vec<_> = chunk.iter().map(|e| &e.image).collect();
        let logits = net.forward(&images)?;
        out.extend(logits.iter().map(|row| argmax(row)));
    }
    Ok(out)
}

/// Fraction of argmax-correct predictions on the clean test set.
pub fn clean_accuracy(net: &Network, clean_test: &Dataset) -> Result<f64> {
    if clean_test.is_empty() {
        return Err(Error::input("clean test set is empty"));
    }
    let preds = predictions(net, clean_test)?;
    let correct = preds
        .iter()
        .zip(clean_test.examples())
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(correct as f64 / clean_test.len() as f64)
}

/// Fraction of backdoor-test examples predicted as the target label.
pub fn attack_success_rate(
    net: &Network,
    backdoor_test: &Dataset,
    target_label: usize,
) -> Result<f64> {
    if backdoor_test.is_empty() {
        return Err(Error::input("backdoor test set is empty"));
    }
    let preds = predictions(net, backdoor_test)?;
    let hits = preds.iter().filter(|&&p| p == target_label).count();
    Ok(hits as f64 / backdoor_test.len() as f64)
}

/// `|isolated and truly poisoned| / |isolated|`.
pub fn isolation_precision(result: &IsolationResult, ground_truth: &Dataset) -> Result<f64> {
    if result.isolated_ids.is_empty() {
        return Err(Error::input("isolated set is empty"));
    }
    let poisoned: BTreeSet<u64> = ground_truth
        .examples()
        .iter()
        .filter(|e| e.ground_truth_poisoned())
        .map(|e| e.id)
        .collect();
    let tp = result.isolated_ids.intersection(&poisoned).count();
    Ok(tp as f64 / result.isolated_ids.len() as f64)
}

/// Splits a trace into per-epoch mean losses over ground-truth clean and
/// poisoned examples.
pub fn loss_curves(trace: &LossTrace, ground_truth: &Dataset) -> Result<LossCurves> {
    let poisoned: BTreeSet<u64> = ground_truth
        .examples()
        .iter()
        .filter(|e| e.ground_truth_poisoned())
        .map(|e| e.id)
        .collect();
    let mut mean_clean = Vec::with_capacity(trace.epochs_recorded());
    let mut mean_backdoor = Vec::with_capacity(trace.epochs_recorded());
    for epoch in 0..trace.epochs_recorded() {
        let mut clean_sum = 0.0;
        let mut clean_n = 0usize;
        let mut bad_sum = 0.0;
        let mut bad_n = 0usize;
        for (id, loss) in trace.epoch_pairs(epoch) {
            if poisoned.contains(&id) {
                bad_sum += loss;
                bad_n += 1;
            } else {
                clean_sum += loss;
                clean_n += 1;
            }
        }
        mean_clean.push(if clean_n == 0 { 0.0 } else { clean_sum / clean_n as f64 });
        mean_backdoor.push(if bad_n == 0 { 0.0 } else { bad_sum / bad_n as f64 });
    }
    Ok(LossCurves {
        mean_clean,
        mean_backdoor,
    })
}

/// Writes the trace as `epoch,example_id,loss,ground_truth_poisoned` rows.
pub fn write_trace_csv(
    trace: &LossTrace,
    ground_truth: &Dataset,
    out: &mut impl Write,
) -> Result<()> {
    let poisoned: BTreeSet<u64> = ground_truth
        .examples()
        .iter()
        .filter(|e| e.ground_truth_poisoned())
        .map(|e| e.id)
        .collect();
    writeln!(out, "epoch,example_id,loss,ground_truth_poisoned")?;
    for epoch in 0..trace.epochs_recorded() {
        for (id, loss) in trace.epoch_pairs(epoch) {
            let flag = u8::from(poisoned.contains(&id));
            writeln!(out, "{epoch},{id},{loss},{flag}")?;
        }
    }
    Ok(())
}
