//! Self-distillation training: losses, AdamW, datasets and the epoch loop.

mod data;
mod loss;
mod optim;

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::engine::exit_records;
use crate::error::{Error, Result};
use crate::model::DynPerceiver;
use crate::tensor::checkpoint::save_checkpoint;
use crate::tensor::{rng, Gradients, Graph, ParamStore, Tensor, Var};

pub use data::{
    generate_synthetic, idx_dataset, load_idx, parse_idx_images, parse_idx_labels, Dataset, Split, SyntheticSpec,
    PRIMITIVES,
};
pub use loss::{cross_entropy, kl_soft, total_loss, LossWeights};
pub use optim::{AdamW, LrSchedule};

/// Samples per forward/backward graph. Fixed so that the gradient summation
/// order, and hence every result, does not depend on the thread count.
pub const GRAPH_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub seed: u64,
    /// Written with the final parameters once training ends.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            warmup_epochs: 2,
            weight_decay: 0.05,
            loss: LossWeights::default(),
            seed: 0,
            checkpoint: None,
        }
    }
}

/// One line of training history.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    /// Held-out accuracy of each enabled exit.
    pub accuracy: [Option<f64>; 4],
}

pub const HISTORY_HEADER: &str = "epoch,loss,acc_exit1,acc_exit2,acc_exit3,acc_exit4";

pub fn write_history<W: Write>(mut w: W, rows: &[HistoryRow]) -> Result<()> {
    writeln!(w, "{HISTORY_HEADER}")?;
    for r in rows {
        let acc: Vec<String> = r.accuracy.iter().map(|a| a.map(|v| v.to_string()).unwrap_or_default()).collect();
        writeln!(w, "{},{},{}", r.epoch, r.loss, acc.join(","))?;
    }
    Ok(())
}

/// Forward and backward for one chunk of samples; the loss is pre-scaled by
/// `chunk / batch` so that summed chunk gradients equal the batch-mean gradient.
fn chunk_gradients(
    net: &DynPerceiver,
    store: &ParamStore,
    images: Tensor,
    labels: &[usize],
    batch: usize,
    w: &LossWeights,
) -> Result<(Graph, Var, Gradients)> {
    let mut g = Graph::new();
    let x = g.constant(images);
    let out = net.forward(store, &mut g, x)?;
    let loss = total_loss(&mut g, &out.logits, labels, w)?;
    let loss = g.scale(loss, labels.len() as f64 / batch as f64);
    g.check_finite(loss, "loss")?;
    let grads = g.backward(loss)?;
    Ok((g, loss, grads))
}

/// Accumulate the batch-mean gradient of [`total_loss`] into `store` (which
/// is zeroed first) and return the batch loss.
pub fn batch_gradients(
    net: &DynPerceiver,
    store: &mut ParamStore,
    images: &Tensor,
    labels: &[usize],
    w: &LossWeights,
) -> Result<f64> {
    let n = labels.len();
    let starts: Vec<usize> = (0..n).step_by(GRAPH_CHUNK).collect();
    let shared: &ParamStore = store;
    let parts = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + GRAPH_CHUNK).min(n)).collect();
            chunk_gradients(net, shared, images.gather(&idx)?, &labels[s..s + idx.len()], n, w)
        })
        .collect::<Result<Vec<_>>>()?;
    store.zero_grad();
    let mut total = 0.0;
    for (g, loss, grads) in &parts {
        g.accumulate_into(grads, store);
        total += g.value(*loss)[0];
    }
    Ok(total)
}

/// Held-out accuracy of every enabled exit.
pub fn exit_accuracies(net: &DynPerceiver, store: &ParamStore, images: &Tensor, labels: &[usize]) -> Result<[Option<f64>; 4]> {
    let records = exit_records(net, store, images, 32)?;
    let mut acc = [None; 4];
    for (k, slot) in acc.iter_mut().enumerate() {
        if net.config.exits[k] {
            let hits = records.iter().zip(labels).filter(|(r, &y)| r.predictions[k] == y).count();
            *slot = Some(hits as f64 / labels.len() as f64);
        }
    }
    Ok(acc)
}

/// Train on the `Train` split, reporting held-out accuracy after every epoch.
/// `on_epoch` sees each history row as it is produced.
pub fn train(
    net: &DynPerceiver,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&HistoryRow),
) -> Result<Vec<HistoryRow>> {
    cfg.loss.validate()?;
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::config("train", "epochs and batch size must be positive"));
    }
    if data.image_shape() != [net.config.image.channels, net.config.image.height, net.config.image.width] {
        return Err(Error::shape(format!("dataset images {:?} do not match the model input", data.image_shape())));
    }
    if data.num_classes > net.config.num_classes {
        return Err(Error::config("num_classes", format!("dataset has {} classes", data.num_classes)));
    }
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::contract("dataset has no training split"));
    }
    let held = data.held_out();
    let held_out = if held.is_empty() { None } else { Some(data.gather(&held)?) };

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule {
        base: cfg.lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(store, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng::stream(cfg.seed, &format!("train.shuffle.{epoch}")));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (images, labels) = data.gather(batch)?;
            loss_sum += batch_gradients(net, store, &images, &labels, &cfg.loss)?;
            opt.step(store, schedule.lr(step))?;
            step += 1;
        }
        let accuracy = match &held_out {
            Some((images, labels)) => exit_accuracies(net, store, images, labels)?,
            None => [None; 4],
        };
        let row = HistoryRow { epoch, loss: loss_sum / steps_per_epoch as f64, accuracy };
        on_epoch(&row);
        history.push(row);
    }
    if let Some(path) = &cfg.checkpoint {
        save_checkpoint(path, store, net.config.hash())?;
    }
    Ok(history)
}
