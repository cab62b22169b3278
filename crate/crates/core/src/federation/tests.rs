use super::*;
use crate::data::{generate_synthetic, partition_noniid, LabelShardScheme, SplitFractions};
use crate::supernet::{ModelSpec, Topology};

fn setup(clients: usize, per_class: usize) -> (LabeledDataset, Vec<Client>, SuperNetModel) {
    let data = generate_synthetic(4, [1, 4, 4], per_class, 0.3, 11).unwrap();
    let scheme = LabelShardScheme::contiguous(4, clients, clients.min(2)).unwrap();
    let plan = partition_noniid(&data, clients, &scheme, SplitFractions::default(), 5).unwrap();
    let spec = ModelSpec {
        input_shape: [1, 4, 4],
        classes: 4,
        width: 2,
        layers: 2,
        candidates: vec!["zero".into(), "identity".into(), "dwsep3e1".into()],
        downsample_after: vec![0],
    };
    let model = SuperNetModel::init(Topology::build(&spec).unwrap(), 3);
    (data, clients_from_plan(plan.clients), model)
}

fn config() -> SearchConfig {
    SearchConfig {
        local_epochs: 1,
        batch_size: 8,
        ..SearchConfig::default()
    }
}

fn ctx<'a>(data: &'a LabeledDataset, cfg: &'a SearchConfig) -> SearchContext<'a> {
    SearchContext {
        data,
        config: cfg,
        latency: None,
        seed: 9,
        stream: Stream::ClientSearch,
    }
}

fn local(model: &SuperNetModel, cfg: &SearchConfig) -> LocalModel {
    let arch = ArchParams::uniform(&model.topology.candidate_counts());
    LocalModel {
        optim: ClientOptim::new(model, &arch, cfg),
        model: model.clone(),
        arch,
    }
}

#[test]
fn zero_epochs_is_identity() {
    let (data, clients, model) = setup(2, 20);
    let cfg = config();
    let start = local(&model, &cfg);
    let (out, stats) =
        client_update(start.clone(), &clients[0], &ctx(&data, &cfg), 0, 0, 0.05).unwrap();
    assert_eq!(out.model, start.model);
    assert_eq!(out.arch, start.arch);
    assert_eq!(stats.audit, UpdateAudit::default());
}

#[test]
fn passes_touch_only_their_registry() {
    let (data, clients, model) = setup(2, 20);
    let cfg = config();
    let c = ctx(&data, &cfg);
    let mut l = local(&model, &cfg);
    let mut rng = stream_rng(0, Stream::ClientSearch, 0, 0);
    let mut audit = UpdateAudit::default();
    let before = l.clone();
    train_pass(&mut l, &clients[0], &c, 0.05, &mut rng, &mut audit).unwrap();
    assert_eq!(l.arch, before.arch);
    assert_ne!(l.model.params, before.model.params);
    let mid = l.clone();
    val_pass(&mut l, &clients[0], &c, &mut rng, &mut audit).unwrap();
    assert_eq!(l.model.params, mid.model.params);
    assert_ne!(l.arch, mid.arch);
    assert!(audit.separated());
    assert!(audit.w_steps > 0 && audit.alpha_steps > 0);
}

#[test]
fn audit_detects_mixed_batches() {
    let (data, mut clients, model) = setup(2, 20);
    let cfg = config();
    let leaked = clients[0].shards.val[0];
    clients[0].shards.train.push(leaked);
    let mut l = local(&model, &cfg);
    let mut audit = UpdateAudit::default();
    let mut rng = stream_rng(0, Stream::ClientSearch, 0, 0);
    train_pass(
        &mut l,
        &clients[0],
        &ctx(&data, &cfg),
        0.05,
        &mut rng,
        &mut audit,
    )
    .unwrap();
    assert!(!audit.separated());
}

#[test]
fn empty_shard_rejected() {
    let (data, mut clients, model) = setup(2, 20);
    let cfg = config();
    clients[0].shards.val.clear();
    assert!(client_update(
        local(&model, &cfg),
        &clients[0],
        &ctx(&data, &cfg),
        1,
        0,
        0.05
    )
    .is_err());
}

#[test]
fn single_client_run_matches_back_to_back_updates() {
    let (data, clients, model) = setup(1, 15);
    let cfg = config();
    let c = ctx(&data, &cfg);
    let rounds = 3;
    let out = run_fdnas(model.clone(), &clients, &c, &RoundOptions::new(rounds)).unwrap();

    let mut l = local(&model, &cfg);
    for r in 0..rounds {
        let lr = cosine_lr(r, rounds, cfg.w_lr).unwrap();
        l.optim.sgd = SgdState::new(l.model.params.len(), cfg.momentum, cfg.weight_decay);
        l = client_update(l, &clients[0], &c, cfg.local_epochs, r, lr)
            .unwrap()
            .0;
    }
    assert_eq!(out.state.model.params, l.model.params);
    assert_eq!(out.state.arch, l.arch);
    assert_eq!(out.history.len(), rounds + 1);
}

#[test]
fn sequential_and_parallel_agree() {
    let (data, clients, model) = setup(3, 15);
    let cfg = config();
    let c = ctx(&data, &cfg);
    let mut opts = RoundOptions::new(2);
    let a = run_fdnas(model.clone(), &clients, &c, &opts).unwrap();
    opts.parallel = false;
    let b = run_fdnas(model, &clients, &c, &opts).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(a.history, b.history);
}

#[test]
fn partial_participation_is_seeded() {
    let (data, clients, model) = setup(4, 15);
    let mut cfg = config();
    cfg.participation = 0.5;
    let c = ctx(&data, &cfg);
    let a = run_fdnas(model.clone(), &clients, &c, &RoundOptions::new(2)).unwrap();
    let b = run_fdnas(model, &clients, &c, &RoundOptions::new(2)).unwrap();
    assert_eq!(a.state, b.state);
    assert_eq!(select_participants(&clients, 0.5, 9, 0).len(), 2);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (data, clients, model) = setup(2, 10);
    let cfg = config();
    let out = run_fdnas(model, &clients, &ctx(&data, &cfg), &RoundOptions::new(1)).unwrap();
    let ck = Checkpoint::new("abc", 9, "search", out.state);
    let text = ck.to_json().unwrap();
    let back = Checkpoint::from_json(&text).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_json().unwrap(), text);
}

#[test]
fn corrupt_checkpoint_rejected() {
    let (_, _, model) = setup(2, 10);
    let ck = Checkpoint::new("abc", 9, "search", ServerState::fresh(model));
    let text = ck.to_json().unwrap();
    assert!(Checkpoint::from_json(&text[..text.len() / 2]).is_err());
    let bumped = text.replacen("\"version\": 1", "\"version\": 7", 1);
    assert!(Checkpoint::from_json(&bumped).is_err());
}

#[test]
fn evaluate_arithmetic() {
    let (data, clients, model) = setup(2, 20);
    let normal = derive_normal_net(
        &model,
        &ArchParams::uniform(&model.topology.candidate_counts()),
    )
    .unwrap();
    let report = evaluate(&normal, &clients, &data, 0, &RetrainConfig::default(), 0).unwrap();
    let mean = report.per_client.iter().sum::<f64>() / 2.0;
    assert_eq!(report.mean_local_acc, mean);
    let pooled: usize = clients.iter().map(|c| c.shards.test.len()).sum();
    let weighted: f64 = clients
        .iter()
        .zip(&report.per_client)
        .map(|(c, a)| a * c.shards.test.len() as f64)
        .sum::<f64>()
        / pooled as f64;
    assert!((report.fed_avg_acc - weighted).abs() < 1e-12);
}

#[test]
fn retrain_zero_rounds_returns_fresh_net() {
    let (data, clients, model) = setup(2, 10);
    let normal = derive_normal_net(
        &model,
        &ArchParams::uniform(&model.topology.candidate_counts()),
    )
    .unwrap();
    let cfg = RetrainConfig {
        rounds: 0,
        ..RetrainConfig::default()
    };
    let out = retrain_fedavg(&normal, &clients, &data, &cfg, 4, true).unwrap();
    assert_eq!(out.net.layers, normal.layers);
    assert_ne!(out.net.params, normal.params);
    assert!(out.history.is_empty());
}

#[test]
fn retrain_single_client_is_centralized_sgd() {
    let (data, clients, model) = setup(1, 15);
    let normal = derive_normal_net(
        &model,
        &ArchParams::uniform(&model.topology.candidate_counts()),
    )
    .unwrap();
    let cfg = RetrainConfig {
        rounds: 3,
        local_epochs: 1,
        batch_size: 8,
        ..RetrainConfig::default()
    };
    let out = retrain_fedavg(&normal, &clients, &data, &cfg, 4, false).unwrap();

    let mut net = normal.reinitialized(crate::seeds::stream_seed(4, Stream::RetrainInit, 0, 0));
    for r in 0..cfg.rounds {
        let mut state = SgdState::new(net.params.len(), cfg.momentum, cfg.weight_decay);
        let lr = cosine_lr(r, cfg.rounds, cfg.lr).unwrap();
        let mut rng = stream_rng(4, Stream::ClientRetrain, 0, r as u64);
        retrain::sgd_epochs(
            &mut net,
            &data,
            &clients[0].shards.train,
            1,
            8,
            lr,
            cfg.grad_clip,
            &mut state,
            &mut rng,
        )
        .unwrap();
    }
    assert_eq!(out.net.params, net.params);
}
