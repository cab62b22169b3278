//! Command-line front end.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::experiment::{Experiment, NetArtifact};
use crate::federation::{write_metrics_csv, Checkpoint, MetricsRecord, UpdateAudit};
use crate::supernet::{count_flops_params, derive_normal_net, FlopsParams, NormalNet};

#[derive(Debug, Parser)]
#[command(
    name = "fdnas",
    version,
    about = "Federated direct neural architecture search simulator"
)]
pub struct Cli {
    /// Worker threads for client updates (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the output directory in the config.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Federated search from scratch.
    Search(Common),
    /// Per-group refinement starting from a search checkpoint.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Divide group aggregates by the whole federation's data size.
        #[arg(long)]
        global_size_aggregation: bool,
    },
    /// Derive the discrete network from a checkpoint.
    Derive {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Federated retraining of a derived network from scratch.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        net: PathBuf,
    },
    /// Federated-averaged and mean local accuracy of a network.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        net: PathBuf,
    },
    /// Quick internal consistency checks.
    Selftest,
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Files are collected in memory and written only once everything succeeded.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    fn add(&mut self, path: PathBuf, bytes: impl Into<Vec<u8>>) {
        self.files.push((path, bytes.into()));
    }

    fn json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
        text.push('\n');
        self.add(path, text);
        Ok(())
    }

    fn metrics(&mut self, path: PathBuf, rows: &[MetricsRecord]) -> Result<()> {
        let mut buf = Vec::new();
        write_metrics_csv(rows, &mut buf)?;
        self.add(path, buf);
        Ok(())
    }

    fn commit(self) -> Result<()> {
        for (path, bytes) in self.files {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)
                    .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            }
            std::fs::write(&path, bytes)
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct NetReport {
    choices: Vec<usize>,
    layers: usize,
    macs: u64,
    params: u64,
    supernet_max_path_macs: Option<u64>,
}

impl NetReport {
    fn new(net: &NormalNet, max_path: Option<u64>) -> Self {
        let FlopsParams { macs, params } = count_flops_params(net);
        NetReport {
            choices: net.choices.clone(),
            layers: net.layers.len(),
            macs,
            params,
            supernet_max_path_macs: max_path,
        }
    }
}

#[derive(Serialize)]
struct SearchSummary<'a> {
    config_hash: &'a str,
    seed: u64,
    rounds: usize,
    final_metrics: &'a MetricsRecord,
    derived: NetReport,
    audit: UpdateAudit,
    checkpoint_sha256: String,
}

fn add_net(out: &mut Outputs, dir: &Path, art: &NetArtifact, max_path: Option<u64>) -> Result<()> {
    out.add(dir.join("net.json"), art.to_json()?);
    out.add(dir.join("net.txt"), art.net.listing());
    out.json(dir.join("report.json"), &NetReport::new(&art.net, max_path))
}

pub fn cmd_search(common: &Common) -> Result<()> {
    let exp = Experiment::prepare(load_config(common)?)?;
    let outcome = exp.run_search()?;
    let dir = exp.config.output_dir.clone();
    let ck = Checkpoint::new(&exp.hash, exp.config.seed, "search", outcome.state.clone());
    let normal = derive_normal_net(&outcome.state.model, &outcome.state.arch)?;
    let max_path = outcome.state.model.max_path_flops()?;
    let mut out = Outputs::default();
    out.add(dir.join("checkpoint.json"), ck.to_json()?);
    out.metrics(dir.join("metrics.csv"), &outcome.history)?;
    out.json(
        dir.join("summary.json"),
        &SearchSummary {
            config_hash: &exp.hash,
            seed: exp.config.seed,
            rounds: exp.config.search.rounds,
            final_metrics: outcome.history.last().expect("round-0 row"),
            derived: NetReport::new(&normal, Some(max_path)),
            audit: outcome.audit,
            checkpoint_sha256: ck.digest()?,
        },
    )?;
    out.commit()?;
    println!("search finished: {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct GroupSummary {
    group: usize,
    clients: Vec<usize>,
    hardware: Option<String>,
    final_metrics: MetricsRecord,
    derived: NetReport,
}

pub fn cmd_cluster(common: &Common, checkpoint: &Path, strict: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.cluster.global_size_aggregation |= strict;
    let exp = Experiment::prepare(cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.state.model.topology != exp.topology()? {
        return Err(Error::Topology(
            "checkpoint network differs from the configured model".into(),
        ));
    }
    let spec = exp.cluster_spec()?;
    let groups = exp.group_runner().run_cfdnas(&ck.state, &spec)?;
    let dir = exp.config.output_dir.join("groups");
    let mut out = Outputs::default();
    let mut summary = Vec::new();
    for g in groups {
        let gdir = dir.join(format!("group_{}", g.group));
        let max_path = g.state.model.max_path_flops()?;
        let gck = Checkpoint::new(
            &exp.hash,
            exp.config.seed,
            format!("cluster/{}", g.group),
            g.state,
        );
        out.add(gdir.join("checkpoint.json"), gck.to_json()?);
        out.metrics(gdir.join("metrics.csv"), &g.history)?;
        add_net(
            &mut out,
            &gdir,
            &exp.net_artifact(g.normal.clone()),
            Some(max_path),
        )?;
        summary.push(GroupSummary {
            group: g.group,
            clients: g.clients,
            hardware: g.hardware,
            final_metrics: g.history.last().cloned().unwrap_or_default(),
            derived: NetReport::new(&g.normal, Some(max_path)),
        });
    }
    out.json(dir.join("summary.json"), &summary)?;
    out.commit()?;
    println!("{} groups written under {}", summary.len(), dir.display());
    Ok(())
}

pub fn cmd_derive(checkpoint: &Path, out_dir: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let normal = derive_normal_net(&ck.state.model, &ck.state.arch)?;
    let art = NetArtifact {
        version: crate::experiment::NET_ARTIFACT_VERSION,
        config_hash: ck.config_hash.clone(),
        seed: ck.seed,
        net: normal,
    };
    let mut out = Outputs::default();
    add_net(
        &mut out,
        out_dir,
        &art,
        Some(ck.state.model.max_path_flops()?),
    )?;
    out.commit()?;
    print!("{}", art.net.listing());
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    config_hash: &'a str,
    seed: u64,
    fed_avg_acc: f64,
    mean_local_acc: f64,
    per_client: &'a [f64],
}

pub fn cmd_retrain(common: &Common, net: &Path) -> Result<()> {
    let exp = Experiment::prepare(load_config(common)?)?;
    let art = NetArtifact::load(net)?;
    let outcome = exp.retrain(&art.net)?;
    let report = exp.evaluate(&outcome.net)?;
    let dir = exp.config.output_dir.clone();
    let mut out = Outputs::default();
    out.add(
        dir.join("retrained_net.json"),
        exp.net_artifact(outcome.net).to_json()?,
    );
    out.metrics(dir.join("retrain_metrics.csv"), &outcome.history)?;
    out.json(
        dir.join("retrain_summary.json"),
        &EvalSummary {
            config_hash: &exp.hash,
            seed: exp.config.seed,
            fed_avg_acc: report.fed_avg_acc,
            mean_local_acc: report.mean_local_acc,
            per_client: &report.per_client,
        },
    )?;
    out.commit()?;
    println!(
        "fed_avg_acc {:.4}  mean_local_acc {:.4}",
        report.fed_avg_acc, report.mean_local_acc
    );
    Ok(())
}

pub fn cmd_eval(common: &Common, net: &Path) -> Result<()> {
    let exp = Experiment::prepare(load_config(common)?)?;
    let art = NetArtifact::load(net)?;
    let report = exp.evaluate(&art.net)?;
    println!("fed_avg_acc     {:.4}", report.fed_avg_acc);
    println!("mean_local_acc  {:.4}", report.mean_local_acc);
    println!("client  local_acc");
    for (c, acc) in exp.clients.iter().zip(&report.per_client) {
        println!("{:>6}  {acc:.4}", c.id);
    }
    let mut out = Outputs::default();
    out.json(
        exp.config.output_dir.join("eval.json"),
        &EvalSummary {
            config_hash: &exp.hash,
            seed: exp.config.seed,
            fed_avg_acc: report.fed_avg_acc,
            mean_local_acc: report.mean_local_acc,
            per_client: &report.per_client,
        },
    )?;
    out.commit()
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("threads", e.to_string()))?;
    }
    match &cli.command {
        Command::Search(common) => cmd_search(common),
        Command::Cluster {
            common,
            checkpoint,
            global_size_aggregation,
        } => cmd_cluster(common, checkpoint, *global_size_aggregation),
        Command::Derive {
            checkpoint,
            out_dir,
        } => cmd_derive(checkpoint, out_dir),
        Command::Retrain { common, net } => cmd_retrain(common, net),
        Command::Eval { common, net } => cmd_eval(common, net),
        Command::Selftest => {
            let failed = crate::selftest::run_all()
                .into_iter()
                .filter(|(name, ok)| {
                    println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
                    !ok
                })
                .count();
            if failed == 0 {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{failed} self-test check(s) failed"
                )))
            }
        }
    }
}
