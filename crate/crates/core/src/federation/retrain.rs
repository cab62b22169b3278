use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aggregate, Client, MetricsRecord, Normalization};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{argmax, clip_grad_norm, cosine_lr, cross_entropy, sgd_momentum_step, SgdState};
use crate::seeds::{stream_rng, stream_seed, Stream};
use crate::supernet::NormalNet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Upper bound on the L2 norm of each gradient.
    pub grad_clip: Option<f64>,
    /// Client-side epochs on a copy before measuring local accuracy.
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            rounds: 40,
            local_epochs: 2,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: Some(5.0),
            finetune_epochs: 2,
            finetune_lr: 0.01,
        }
    }
}

impl RetrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("retrain.batch_size", "must be at least 1"));
        }
        for (name, v) in [
            ("retrain.lr", self.lr),
            ("retrain.finetune_lr", self.finetune_lr),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config(
                    "retrain.grad_clip",
                    format!("must be positive, got {c}"),
                ));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("retrain.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("retrain.weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

/// Minibatch SGD passes over `indices`. Returns the example-weighted mean loss.
pub(crate) fn sgd_epochs<R: Rng>(
    net: &mut NormalNet,
    data: &LabeledDataset,
    indices: &[usize],
    epochs: usize,
    batch_size: usize,
    lr: f64,
    grad_clip: Option<f64>,
    state: &mut SgdState,
    rng: &mut R,
) -> Result<f64> {
    let mut order = indices.to_vec();
    let (mut total, mut seen) = (0.0, 0);
    for _ in 0..epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch_size) {
            let (x, labels) = data.batch(chunk)?;
            let (logits, caches) = net.forward(&x)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("retraining loss".into()));
            }
            let mut grads = net.backward(&caches, &grad)?;
            if let Some(max) = grad_clip {
                clip_grad_norm(&mut grads, max);
            }
            sgd_momentum_step(net.params.values_mut(), &grads, state, lr)?;
            total += loss * chunk.len() as f64;
            seen += chunk.len();
        }
    }
    Ok(if seen == 0 { 0.0 } else { total / seen as f64 })
}

pub(crate) fn count_correct(
    net: &NormalNet,
    data: &LabeledDataset,
    indices: &[usize],
) -> Result<usize> {
    let mut correct = 0;
    for chunk in indices.chunks(256) {
        let (x, labels) = data.batch(chunk)?;
        let (logits, _) = net.forward(&x)?;
        let (_, classes) = logits.dims2()?;
        for (row, &y) in logits.data().chunks(classes).zip(&labels) {
            correct += usize::from(argmax(row) == y);
        }
    }
    Ok(correct)
}

fn mean_loss(net: &NormalNet, data: &LabeledDataset, indices: &[usize]) -> Result<f64> {
    let (mut total, mut seen) = (0.0, 0);
    for chunk in indices.chunks(256) {
        let (x, labels) = data.batch(chunk)?;
        let (logits, _) = net.forward(&x)?;
        total += cross_entropy(&logits, &labels)?.0 * chunk.len() as f64;
        seen += chunk.len();
    }
    Ok(if seen == 0 { 0.0 } else { total / seen as f64 })
}

#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub net: NormalNet,
    pub history: Vec<MetricsRecord>,
}

/// FedAvg from scratch on the weights of a fixed architecture. The net's
/// weights are redrawn from the seed before round 1. Clients start every
/// round with zero momentum.
pub fn retrain_fedavg(
    net: &NormalNet,
    clients: &[Client],
    data: &LabeledDataset,
    cfg: &RetrainConfig,
    seed: u64,
    parallel: bool,
) -> Result<RetrainOutcome> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::InvalidArgument(
            "retraining needs at least one client".into(),
        ));
    }
    let mut global = net.reinitialized(stream_seed(seed, Stream::RetrainInit, 0, 0));
    let sizes: Vec<usize> = clients.iter().map(Client::size).collect();
    let mut history = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let lr = cosine_lr(r, cfg.rounds, cfg.lr)?;
        let work = |c: &Client| -> Result<(NormalNet, f64)> {
            if c.shards.train.is_empty() {
                return Err(Error::EmptyShard(format!(
                    "client {} has no training data",
                    c.id
                )));
            }
            let mut local = global.clone();
            let mut state = SgdState::new(local.params.len(), cfg.momentum, cfg.weight_decay);
            let mut rng = stream_rng(seed, Stream::ClientRetrain, c.id as u64, r as u64);
            let loss = sgd_epochs(
                &mut local,
                data,
                &c.shards.train,
                cfg.local_epochs,
                cfg.batch_size,
                lr,
                cfg.grad_clip,
                &mut state,
                &mut rng,
            )?;
            Ok((local, loss))
        };
        let results: Vec<Result<(NormalNet, f64)>> = if parallel {
            clients.par_iter().map(work).collect()
        } else {
            clients.iter().map(work).collect()
        };
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let updates: Vec<&[f64]> = results.iter().map(|(n, _)| n.params.values()).collect();
        let w = aggregate(&updates, &sizes, &Normalization::Participants)?;
        global.params.values_mut().copy_from_slice(&w);

        let mut val = 0.0;
        for c in clients {
            val += mean_loss(&global, data, &c.shards.val)?;
        }
        let report = evaluate(&global, clients, data, 0, cfg, seed)?;
        history.push(MetricsRecord {
            round: r + 1,
            mean_train_loss: results.iter().map(|(_, l)| l).sum::<f64>() / clients.len() as f64,
            mean_val_loss: val / clients.len() as f64,
            fed_avg_acc: report.fed_avg_acc,
            mean_local_acc: report.mean_local_acc,
            expected_latency_ms: 0.0,
            wall_clock_s: 0.0,
        });
    }
    Ok(RetrainOutcome {
        net: global,
        history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy of the shared model on the union of all test shards.
    pub fed_avg_acc: f64,
    /// Mean over clients of test accuracy after local fine-tuning.
    pub mean_local_acc: f64,
    pub per_client: Vec<f64>,
}

/// Both accuracy metrics. Fine-tuning runs `local_epochs` passes over each
/// client's train shard on a private copy of `net`.
pub fn evaluate(
    net: &NormalNet,
    clients: &[Client],
    data: &LabeledDataset,
    local_epochs: usize,
    cfg: &RetrainConfig,
    seed: u64,
) -> Result<EvalReport> {
    let (mut pooled_correct, mut pooled_total) = (0, 0);
    let mut per_client = Vec::with_capacity(clients.len());
    for c in clients {
        if c.shards.test.is_empty() {
            return Err(Error::EmptyShard(format!(
                "client {} has no test data",
                c.id
            )));
        }
        let shared = count_correct(net, data, &c.shards.test)?;
        pooled_correct += shared;
        pooled_total += c.shards.test.len();
        let local_correct = if local_epochs == 0 {
            shared
        } else {
            let mut copy = net.clone();
            let mut state = SgdState::new(copy.params.len(), cfg.momentum, cfg.weight_decay);
            let mut rng = stream_rng(seed, Stream::Finetune, c.id as u64, 0);
            sgd_epochs(
                &mut copy,
                data,
                &c.shards.train,
                local_epochs,
                cfg.batch_size,
                cfg.finetune_lr,
                cfg.grad_clip,
                &mut state,
                &mut rng,
            )?;
            count_correct(&copy, data, &c.shards.test)?
        };
        per_client.push(local_correct as f64 / c.shards.test.len() as f64);
    }
    if per_client.is_empty() {
        return Err(Error::EmptyShard("no clients to evaluate".into()));
    }
    Ok(EvalReport {
        fed_avg_acc: pooled_correct as f64 / pooled_total as f64,
        mean_local_acc: per_client.iter().sum::<f64>() / per_client.len() as f64,
        per_client,
    })
}
