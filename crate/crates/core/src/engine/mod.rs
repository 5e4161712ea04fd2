//! Confidence-gated early-exit inference and its cost accounting.

mod flops;

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::DynPerceiver;
use crate::tensor::{kernels, Graph, ParamStore, Tensor};

pub use flops::{classification_stage_flops, feature_stage_flops, flops_profile, FlopsProfile, Segment};

/// Maximum softmax probability of one logit row.
pub fn confidence(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() || logits.iter().any(|v| v.is_nan()) {
        return Err(Error::numerical("confidence of NaN or empty logits"));
    }
    let mut p = vec![0.0; logits.len()];
    kernels::softmax_row(logits, &mut p);
    Ok(p.into_iter().fold(0.0, f64::max))
}

/// First index of the largest logit.
pub fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Per-exit confidence thresholds. Inference stops at the first enabled exit
/// whose confidence is at least its threshold; exit 4 always fires.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExitPolicy {
    thresholds: [f64; 4],
}

impl ExitPolicy {
    pub fn new(thresholds: [f64; 4]) -> Result<Self> {
        if thresholds.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::contract(format!("thresholds must be finite and non-negative, got {thresholds:?}")));
        }
        if thresholds[3] != 0.0 {
            return Err(Error::contract(format!("the last threshold must be 0, got {}", thresholds[3])));
        }
        Ok(ExitPolicy { thresholds })
    }

    /// Every sample leaves at the first enabled exit.
    pub fn earliest() -> Self {
        ExitPolicy { thresholds: [0.0; 4] }
    }

    /// Every sample runs to exit 4.
    pub fn full() -> Self {
        ExitPolicy { thresholds: [1.01, 1.01, 1.01, 0.0] }
    }

    pub fn thresholds(&self) -> [f64; 4] {
        self.thresholds
    }

    pub fn threshold(&self, exit: usize) -> f64 {
        self.thresholds[exit - 1]
    }

    /// Exit taken by a sample with the given per-exit confidences.
    pub fn gate(&self, confidences: &[f64; 4], enabled: [bool; 4]) -> usize {
        (1..=4).find(|&k| enabled[k - 1] && (k == 4 || confidences[k - 1] >= self.threshold(k))).unwrap_or(4)
    }
}

/// Record of one early-exit inference.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitTrace {
    pub exit_taken: usize,
    /// `(exit, confidence)` for every exit evaluated, in order.
    pub confidences: Vec<(usize, f64)>,
    pub flops_used: u64,
    pub prediction: usize,
}

/// Run one image (`[C, H, W]` or `[1, C, H, W]`) through the early-exit
/// schedule, stopping at the first exit whose confidence clears its threshold.
pub fn infer(
    net: &DynPerceiver,
    store: &ParamStore,
    image: &Tensor,
    policy: &ExitPolicy,
    profile: &FlopsProfile,
) -> Result<ExitTrace> {
    let image = match image.rank() {
        3 => image.clone().reshape(&[&[1], image.shape()].concat())?,
        4 if image.shape()[0] == 1 => image.clone(),
        _ => return Err(Error::shape(format!("infer takes one image, got shape {:?}", image.shape()))),
    };
    let enabled = net.config.exits;
    let mut g = Graph::inference();
    let x = g.constant(image);
    let mut exe = net.start(store, &mut g, x)?;
    let mut confidences = Vec::new();
    for k in 1..=4 {
        if !enabled[k - 1] {
            continue;
        }
        let logits = exe.advance_to_exit(k)?.expect("enabled exits are always evaluated");
        let row = exe.graph_ref().value(logits);
        let c = confidence(row)?;
        confidences.push((k, c));
        if k == 4 || c >= policy.threshold(k) {
            debug_assert_eq!(exe.graph_ref().flops(), profile.cost(k));
            return Ok(ExitTrace { exit_taken: k, confidences, flops_used: profile.cost(k), prediction: argmax(row) });
        }
    }
    unreachable!("exit 4 is always enabled")
}

/// Aggregate result of [`batch_evaluate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_flops: f64,
    pub exit_histogram: [usize; 4],
    pub traces: Vec<ExitTrace>,
}

impl Evaluation {
    fn from_traces(traces: Vec<ExitTrace>, labels: &[usize]) -> Self {
        let n = traces.len() as f64;
        let mut hist = [0usize; 4];
        let mut correct = 0usize;
        let mut flops = 0u64;
        for (t, &y) in traces.iter().zip(labels) {
            hist[t.exit_taken - 1] += 1;
            correct += usize::from(t.prediction == y);
            flops += t.flops_used;
        }
        Evaluation { accuracy: correct as f64 / n, mean_flops: flops as f64 / n, exit_histogram: hist, traces }
    }
}

/// [`infer`] over every image of `images` (`[N, C, H, W]`).
pub fn batch_evaluate(
    net: &DynPerceiver,
    store: &ParamStore,
    images: &Tensor,
    labels: &[usize],
    policy: &ExitPolicy,
) -> Result<Evaluation> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    if images.rank() != 4 || images.shape()[0] != n {
        return Err(Error::shape(format!("{} labels for images of shape {:?}", n, images.shape())));
    }
    let profile = flops_profile(&net.config);
    let traces = (0..n)
        .into_par_iter()
        .map(|i| infer(net, store, &images.select(i)?, policy, &profile))
        .collect::<Result<Vec<_>>>()?;
    Ok(Evaluation::from_traces(traces, labels))
}

/// Logits of every enabled exit for every image, from batched full forward
/// passes. `records[i].logits[k - 1]` is `None` for disabled exits.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitRecord {
    pub logits: [Option<Vec<f64>>; 4],
    pub confidences: [f64; 4],
    pub predictions: [usize; 4],
}

/// Full-forward logits for all images, `chunk` samples per graph.
pub fn exit_records(net: &DynPerceiver, store: &ParamStore, images: &Tensor, chunk: usize) -> Result<Vec<ExitRecord>> {
    let n = images.shape()[0];
    let starts: Vec<usize> = (0..n).step_by(chunk.max(1)).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + chunk.max(1)).min(n)).collect();
            let mut g = Graph::inference();
            let x = g.constant(images.gather(&idx)?);
            let out = net.forward(store, &mut g, x)?;
            let mut recs = Vec::with_capacity(idx.len());
            for b in 0..idx.len() {
                let mut rec = ExitRecord { logits: [None, None, None, None], confidences: [0.0; 4], predictions: [0; 4] };
                for k in 0..4 {
                    if let Some(v) = out.logits[k] {
                        let kcls = net.config.num_classes;
                        let row = g.value(v)[b * kcls..(b + 1) * kcls].to_vec();
                        rec.confidences[k] = confidence(&row)?;
                        rec.predictions[k] = argmax(&row);
                        rec.logits[k] = Some(row);
                    }
                }
                recs.push(rec);
            }
            Ok(recs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// Post-hoc gating of precomputed records; identical to running [`infer`] on
/// each sample, without recomputation.
pub fn evaluate_records(
    records: &[ExitRecord],
    labels: &[usize],
    policy: &ExitPolicy,
    enabled: [bool; 4],
    profile: &FlopsProfile,
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::contract("cannot evaluate an empty dataset"));
    }
    let traces = records
        .iter()
        .map(|r| {
            let k = policy.gate(&r.confidences, enabled);
            ExitTrace {
                exit_taken: k,
                confidences: (1..=k).filter(|&j| enabled[j - 1]).map(|j| (j, r.confidences[j - 1])).collect(),
                flops_used: profile.cost(k),
                prediction: r.predictions[k - 1],
            }
        })
        .collect();
    Ok(Evaluation::from_traces(traces, labels))
}

/// One line per sample: `sample,exit,confidences,flops`, where confidences
/// lists `exit:value` pairs separated by `;`.
pub fn write_trace_log<W: Write>(mut w: W, traces: &[ExitTrace]) -> Result<()> {
    writeln!(w, "sample,exit,confidences,flops")?;
    for (i, t) in traces.iter().enumerate() {
        let confs: Vec<String> = t.confidences.iter().map(|(k, c)| format!("{k}:{c}")).collect();
        writeln!(w, "{i},{},{},{}", t.exit_taken, confs.join(";"), t.flops_used)?;
    }
    Ok(())
}
