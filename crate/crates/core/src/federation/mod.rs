//! Federated search: local bilevel client updates, size-weighted
//! aggregation of weights and architecture logits, and the round loop.

mod aggregate;
mod checkpoint;
mod metrics;
mod retrain;

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, aggregate_models, Normalization};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use metrics::{write_metrics_csv, MetricsRecord, METRICS_COLUMNS};
pub use retrain::{evaluate, retrain_fedavg, EvalReport, RetrainConfig, RetrainOutcome};

use crate::data::{ClientShards, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{adam_step, clip_grad_norm, cosine_lr, cross_entropy, AdamState, SgdState};
use crate::seeds::{stream_rng, Stream};
use crate::supernet::{
    derive_normal_net, expected_latency, sample_gates, ArchParams, LatencyTable, SuperNetModel,
};

/// Static description of one simulated edge device.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Client {
    pub id: usize,
    pub shards: ClientShards,
    pub tag: String,
    pub hardware: String,
}

impl Client {
    /// N_k: the examples the client trains and searches on.
    pub fn size(&self) -> usize {
        self.shards.train.len() + self.shards.val.len()
    }
}

/// Builds clients from a shard plan; tags and hardware default to empty.
pub fn clients_from_plan(shards: Vec<ClientShards>) -> Vec<Client> {
    shards
        .into_iter()
        .enumerate()
        .map(|(id, shards)| Client {
            id,
            shards,
            tag: String::new(),
            hardware: String::new(),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    /// Initial weight learning rate, cosine-decayed over the rounds.
    pub w_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub latency_weight: f64,
    /// Upper bound on the L2 norm of each weight gradient.
    pub grad_clip: Option<f64>,
    /// Fraction of clients selected per round.
    pub participation: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            local_epochs: 5,
            batch_size: 32,
            w_lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            alpha_lr: 0.02,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            latency_weight: 0.0,
            grad_clip: Some(5.0),
            participation: 1.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(name, format!("must be positive, got {v}")))
            }
        };
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        positive("w_lr", self.w_lr)?;
        positive("alpha_lr", self.alpha_lr)?;
        positive("adam_eps", self.adam_eps)?;
        for (name, v) in [
            ("momentum", self.momentum),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(name, format!("must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if !(self.latency_weight.is_finite() && self.latency_weight >= 0.0) {
            return Err(Error::config("latency_weight", "must be >= 0"));
        }
        if let Some(c) = self.grad_clip {
            positive("grad_clip", c)?;
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("participation", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Per-client optimizer slots for one round. The weight momentum starts at
/// zero every round; the architecture Adam moments persist across rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientOptim {
    pub sgd: SgdState,
    pub adam: AdamState,
}

impl ClientOptim {
    pub fn new(model: &SuperNetModel, arch: &ArchParams, cfg: &SearchConfig) -> Self {
        ClientOptim {
            sgd: SgdState::new(model.params.len(), cfg.momentum, cfg.weight_decay),
            adam: AdamState::new(
                arch.flatten().len(),
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            ),
        }
    }
}

/// Global model, architecture, round counter and every client's
/// architecture-optimizer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub round: usize,
    pub model: SuperNetModel,
    pub arch: ArchParams,
    pub optimizers: BTreeMap<usize, AdamState>,
}

impl ServerState {
    pub fn fresh(model: SuperNetModel) -> Self {
        let arch = ArchParams::uniform(&model.topology.candidate_counts());
        ServerState {
            round: 0,
            model,
            arch,
            optimizers: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.topology.check_arch(&self.arch)?;
        if !self.arch.is_finite() || self.model.params.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("server state".into()));
        }
        let na = self.arch.flatten().len();
        for (id, opt) in &self.optimizers {
            if opt.first.len() != na || opt.second.len() != na {
                return Err(Error::Topology(format!(
                    "optimizer state of client {id} does not match the network"
                )));
            }
        }
        Ok(())
    }
}

/// Counts of optimizer steps by the split the consumed batch came from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateAudit {
    pub w_steps: u64,
    pub alpha_steps: u64,
    pub w_steps_with_val_examples: u64,
    pub alpha_steps_with_train_examples: u64,
}

impl UpdateAudit {
    pub fn merge(&mut self, other: &UpdateAudit) {
        self.w_steps += other.w_steps;
        self.alpha_steps += other.alpha_steps;
        self.w_steps_with_val_examples += other.w_steps_with_val_examples;
        self.alpha_steps_with_train_examples += other.alpha_steps_with_train_examples;
    }

    pub fn separated(&self) -> bool {
        self.w_steps_with_val_examples == 0 && self.alpha_steps_with_train_examples == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalStats {
    /// Example-weighted mean sampled-path loss over all train batches.
    pub train_loss: f64,
    /// Example-weighted mean architecture objective over all val batches.
    pub val_loss: f64,
    pub audit: UpdateAudit,
}

/// Local working copy handed to one client for one round.
#[derive(Clone, Debug)]
pub struct LocalModel {
    pub model: SuperNetModel,
    pub arch: ArchParams,
    pub optim: ClientOptim,
}

/// Everything a client update reads but never writes.
#[derive(Clone, Copy)]
pub struct SearchContext<'a> {
    pub data: &'a LabeledDataset,
    pub config: &'a SearchConfig,
    pub latency: Option<&'a LatencyTable>,
    pub seed: u64,
    pub stream: Stream,
}

struct SplitMembership {
    train: HashSet<usize>,
    val: HashSet<usize>,
}

impl SplitMembership {
    fn of(client: &Client) -> Self {
        SplitMembership {
            train: client.shards.train.iter().copied().collect(),
            val: client.shards.val.iter().copied().collect(),
        }
    }
}

/// One pass over the train shard; only weights change.
pub fn train_pass<R: Rng>(
    local: &mut LocalModel,
    client: &Client,
    ctx: &SearchContext,
    lr: f64,
    rng: &mut R,
    audit: &mut UpdateAudit,
) -> Result<(f64, usize)> {
    let members = SplitMembership::of(client);
    let mut order = client.shards.train.clone();
    order.shuffle(rng);
    let (mut total, mut seen) = (0.0, 0);
    for chunk in order.chunks(ctx.config.batch_size) {
        let gates = sample_gates(&local.arch, rng);
        let (x, labels) = ctx.data.batch(chunk)?;
        let (logits, trace) = local.model.forward_sampled(&gates, &x)?;
        let (loss, grad) = cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "train loss of client {}",
                client.id
            )));
        }
        let mut grads = local.model.backward_sampled(&trace, &grad)?;
        if let Some(max) = ctx.config.grad_clip {
            clip_grad_norm(&mut grads.grads, max);
        }
        let params = local.model.params.values_mut();
        for slot in &grads.active {
            local
                .optim
                .sgd
                .step_range(params, &grads.grads, lr, slot.range())?;
        }
        audit.w_steps += 1;
        if chunk.iter().any(|i| members.val.contains(i)) {
            audit.w_steps_with_val_examples += 1;
        }
        total += loss * chunk.len() as f64;
        seen += chunk.len();
    }
    Ok((total, seen))
}

/// One pass over the validation shard; only architecture logits change.
pub fn val_pass<R: Rng>(
    local: &mut LocalModel,
    client: &Client,
    ctx: &SearchContext,
    rng: &mut R,
    audit: &mut UpdateAudit,
) -> Result<(f64, usize)> {
    let members = SplitMembership::of(client);
    let mut order = client.shards.val.clone();
    order.shuffle(rng);
    let (mut total, mut seen) = (0.0, 0);
    for chunk in order.chunks(ctx.config.batch_size) {
        let (x, labels) = ctx.data.batch(chunk)?;
        let g = local.model.alpha_gradient(
            &local.arch,
            &x,
            &labels,
            ctx.latency,
            ctx.config.latency_weight,
        )?;
        if !g.loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "validation loss of client {}",
                client.id
            )));
        }
        let mut flat = local.arch.flatten();
        let grad: Vec<f64> = g.grad.iter().flatten().copied().collect();
        adam_step(&mut flat, &grad, &mut local.optim.adam, ctx.config.alpha_lr)?;
        local.arch.assign_flat(&flat)?;
        audit.alpha_steps += 1;
        if chunk.iter().any(|i| members.train.contains(i)) {
            audit.alpha_steps_with_train_examples += 1;
        }
        total += g.loss * chunk.len() as f64;
        seen += chunk.len();
    }
    Ok((total, seen))
}

/// `epochs` rounds of (train pass on w, then val pass on alpha), starting
/// from the downloaded globals.
pub fn client_update(
    mut local: LocalModel,
    client: &Client,
    ctx: &SearchContext,
    epochs: usize,
    round: usize,
    lr: f64,
) -> Result<(LocalModel, LocalStats)> {
    if epochs > 0 && (client.shards.train.is_empty() || client.shards.val.is_empty()) {
        return Err(Error::EmptyShard(format!(
            "client {} has an empty train or val shard",
            client.id
        )));
    }
    let mut rng = stream_rng(ctx.seed, ctx.stream, client.id as u64, round as u64);
    let mut audit = UpdateAudit::default();
    let (mut tl, mut tn, mut vl, mut vn) = (0.0, 0, 0.0, 0);
    for _ in 0..epochs {
        let (l, n) = train_pass(&mut local, client, ctx, lr, &mut rng, &mut audit)?;
        tl += l;
        tn += n;
        let (l, n) = val_pass(&mut local, client, ctx, &mut rng, &mut audit)?;
        vl += l;
        vn += n;
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((
        local,
        LocalStats {
            train_loss: mean(tl, tn),
            val_loss: mean(vl, vn),
            audit,
        },
    ))
}

/// How a run of search rounds is executed.
#[derive(Clone, Debug)]
pub struct RoundOptions {
    pub rounds: usize,
    pub normalization: Normalization,
    /// Run client updates on the rayon pool.
    pub parallel: bool,
    pub record_wall_clock: bool,
}

impl RoundOptions {
    pub fn new(rounds: usize) -> Self {
        RoundOptions {
            rounds,
            normalization: Normalization::Participants,
            parallel: true,
            record_wall_clock: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SearchOutcome {
    pub state: ServerState,
    /// Row 0 describes the starting state, row t the state after round t.
    pub history: Vec<MetricsRecord>,
    pub audit: UpdateAudit,
}

/// Server-side snapshot of the global model on the clients' data.
pub fn search_metrics(
    state: &ServerState,
    clients: &[Client],
    data: &LabeledDataset,
    latency: Option<&LatencyTable>,
) -> Result<MetricsRecord> {
    let normal = derive_normal_net(&state.model, &state.arch)?;
    let mut val_losses = Vec::with_capacity(clients.len());
    let mut local_accs = Vec::with_capacity(clients.len());
    let (mut pooled_correct, mut pooled_total) = (0usize, 0usize);
    for c in clients {
        val_losses.push(mixture_loss(
            &state.model,
            &state.arch,
            data,
            &c.shards.val,
        )?);
        let correct = retrain::count_correct(&normal, data, &c.shards.test)?;
        pooled_correct += correct;
        pooled_total += c.shards.test.len();
        if !c.shards.test.is_empty() {
            local_accs.push(correct as f64 / c.shards.test.len() as f64);
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(MetricsRecord {
        round: state.round,
        mean_train_loss: 0.0,
        mean_val_loss: mean(&val_losses),
        fed_avg_acc: if pooled_total == 0 {
            0.0
        } else {
            pooled_correct as f64 / pooled_total as f64
        },
        mean_local_acc: mean(&local_accs),
        expected_latency_ms: match latency {
            Some(t) => expected_latency(&state.arch, t)?.0,
            None => 0.0,
        },
        wall_clock_s: 0.0,
    })
}

/// Mean cross-entropy of the probability-weighted mixture over `indices`.
pub fn mixture_loss(
    model: &SuperNetModel,
    arch: &ArchParams,
    data: &LabeledDataset,
    indices: &[usize],
) -> Result<f64> {
    let (mut total, mut seen) = (0.0, 0);
    for chunk in indices.chunks(256) {
        let (x, labels) = data.batch(chunk)?;
        let (logits, _) = model.forward_mixture(arch, &x)?;
        let (loss, _) = cross_entropy(&logits, &labels)?;
        total += loss * chunk.len() as f64;
        seen += chunk.len();
    }
    Ok(if seen == 0 { 0.0 } else { total / seen as f64 })
}

fn select_participants(clients: &[Client], fraction: f64, seed: u64, round: usize) -> Vec<usize> {
    if fraction >= 1.0 {
        return (0..clients.len()).collect();
    }
    let take = ((clients.len() as f64 * fraction).ceil() as usize).clamp(1, clients.len());
    let mut ids: Vec<usize> = (0..clients.len()).collect();
    ids.shuffle(&mut stream_rng(
        seed,
        Stream::Participation,
        0,
        round as u64,
    ));
    let mut chosen = ids[..take].to_vec();
    chosen.sort_unstable();
    chosen
}

/// Runs `opts.rounds` rounds of broadcast, local update and aggregation,
/// continuing from `state`. The cosine schedule spans `opts.rounds`.
pub fn run_search_rounds(
    mut state: ServerState,
    clients: &[Client],
    ctx: &SearchContext,
    opts: &RoundOptions,
) -> Result<SearchOutcome> {
    ctx.config.validate()?;
    if clients.is_empty() {
        return Err(Error::InvalidArgument(
            "federation needs at least one client".into(),
        ));
    }
    if let Some(table) = ctx.latency {
        table.check_covers(&state.model.topology.candidate_counts())?;
    }
    state.validate()?;
    let na = state.arch.flatten().len();
    for c in clients {
        state.optimizers.entry(c.id).or_insert_with(|| {
            AdamState::new(
                na,
                ctx.config.adam_beta1,
                ctx.config.adam_beta2,
                ctx.config.adam_eps,
            )
        });
    }
    let started = Instant::now();
    let clock = |opts: &RoundOptions| {
        if opts.record_wall_clock {
            started.elapsed().as_secs_f64()
        } else {
            0.0
        }
    };

    let mut first = search_metrics(&state, clients, ctx.data, ctx.latency)?;
    // No local training has happened yet, so row 0 reports the mixture loss.
    let mut train_loss = 0.0;
    for c in clients {
        train_loss += mixture_loss(&state.model, &state.arch, ctx.data, &c.shards.train)?;
    }
    first.mean_train_loss = train_loss / clients.len() as f64;
    first.wall_clock_s = clock(opts);
    let mut history = vec![first];
    let mut audit = UpdateAudit::default();

    for r in 0..opts.rounds {
        let lr = cosine_lr(r, opts.rounds, ctx.config.w_lr)?;
        let chosen = select_participants(clients, ctx.config.participation, ctx.seed, state.round);
        let work = |&i: &usize| -> Result<(LocalModel, LocalStats)> {
            let c = &clients[i];
            let local = LocalModel {
                model: state.model.clone(),
                arch: state.arch.clone(),
                optim: ClientOptim {
                    sgd: SgdState::new(
                        state.model.params.len(),
                        ctx.config.momentum,
                        ctx.config.weight_decay,
                    ),
                    adam: state.optimizers[&c.id].clone(),
                },
            };
            client_update(local, c, ctx, ctx.config.local_epochs, state.round, lr)
        };
        let results: Vec<Result<(LocalModel, LocalStats)>> = if opts.parallel {
            chosen.par_iter().map(work).collect()
        } else {
            chosen.iter().map(work).collect()
        };
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;

        let sizes: Vec<usize> = chosen.iter().map(|&i| clients[i].size()).collect();
        let models: Vec<(&[f64], Vec<f64>)> = results
            .iter()
            .map(|(l, _)| (l.model.params.values(), l.arch.flatten()))
            .collect();
        let (w, a) = aggregate_models(&models, &sizes, &opts.normalization)?;
        state.model.params.values_mut().copy_from_slice(&w);
        state.arch.assign_flat(&a)?;
        state.round += 1;
        if !state.arch.is_finite() || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "aggregated globals after round {}",
                state.round
            )));
        }
        let mut train_loss = 0.0;
        for (&i, (local, stats)) in chosen.iter().zip(results) {
            state.optimizers.insert(clients[i].id, local.optim.adam);
            audit.merge(&stats.audit);
            train_loss += stats.train_loss;
        }
        let mut row = search_metrics(&state, clients, ctx.data, ctx.latency)?;
        row.mean_train_loss = train_loss / chosen.len() as f64;
        row.wall_clock_s = clock(opts);
        history.push(row);
    }
    Ok(SearchOutcome {
        state,
        history,
        audit,
    })
}

/// Federated search from a freshly initialized SuperNet.
pub fn run_fdnas(
    model: SuperNetModel,
    clients: &[Client],
    ctx: &SearchContext,
    opts: &RoundOptions,
) -> Result<SearchOutcome> {
    run_search_rounds(ServerState::fresh(model), clients, ctx, opts)
}

#[cfg(test)]
mod tests;
