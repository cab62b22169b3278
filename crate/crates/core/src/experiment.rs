//! Glue between a loaded [`ExperimentConfig`] and the search, cluster,
//! retrain and evaluation stages.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{apply_cluster_file, split_clusters, ClusterSpec, GroupRunner};
use crate::config::{ExperimentConfig, PartitionKind};
use crate::data::{iid_partition, partition_noniid, LabeledDataset};
use crate::error::{Error, Result};
use crate::federation::{
    clients_from_plan, evaluate, retrain_fedavg, run_fdnas, Client, EvalReport, Normalization,
    RetrainOutcome, RoundOptions, SearchContext, SearchOutcome,
};
use crate::seeds::{stream_seed, Stream};
use crate::supernet::{LatencyTable, NormalNet, SuperNetModel, Topology};

pub const NET_ARTIFACT_VERSION: u32 = 1;

/// A derived network together with the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetArtifact {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub net: NormalNet,
}

impl NetArtifact {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let art: NetArtifact =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if art.version != NET_ARTIFACT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported net artifact version {}",
                art.version
            )));
        }
        art.net
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(art)
    }
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub hash: String,
    pub data: LabeledDataset,
    pub clients: Vec<Client>,
    pub tables: HashMap<String, LatencyTable>,
}

impl Experiment {
    /// Builds the dataset, the shard plan and the clients, and loads every
    /// side file. Nothing is written.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let data = config.dataset()?;
        let p = &config.partition;
        let plan = match p.kind {
            PartitionKind::LabelShard => {
                let scheme = p.scheme(data.classes())?;
                partition_noniid(&data, p.clients, &scheme, p.split(), config.seed)
                    .map_err(|e| Error::config("partition", e.to_string()))?
            }
            PartitionKind::Iid => iid_partition(&data, p.clients, p.split(), config.seed)?,
        };
        let mut clients = clients_from_plan(plan.clients);
        if let Some(path) = &config.cluster.spec {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
            apply_cluster_file(&mut clients, &text)?;
        }
        let tables = match &config.latency.tables {
            Some(path) => LatencyTable::load_all(path)?,
            None if config.search.hyper.latency_weight > 0.0 => {
                return Err(Error::config(
                    "latency.tables",
                    "latency_weight > 0 needs a latency table file",
                ));
            }
            None => HashMap::new(),
        };
        let exp = Experiment {
            config,
            hash,
            data,
            clients,
            tables,
        };
        let counts = exp.topology()?.candidate_counts();
        for table in exp.tables.values() {
            table.check_covers(&counts)?;
        }
        exp.search_latency()?;
        Ok(exp)
    }

    pub fn topology(&self) -> Result<Topology> {
        Topology::build(&self.config.model)
    }

    pub fn initial_model(&self) -> Result<SuperNetModel> {
        Ok(SuperNetModel::init(
            self.topology()?,
            stream_seed(self.config.seed, Stream::SuperNetInit, 0, 0),
        ))
    }

    /// The table bound into the federation-wide search, if any.
    pub fn search_latency(&self) -> Result<Option<&LatencyTable>> {
        match &self.config.latency.search_profile {
            Some(p) => self.tables.get(p).map(Some).ok_or_else(|| {
                Error::config(
                    "latency.search_profile",
                    format!("no table for profile `{p}`"),
                )
            }),
            None => Ok(None),
        }
    }

    pub fn search_context(&self) -> Result<SearchContext<'_>> {
        Ok(SearchContext {
            data: &self.data,
            config: &self.config.search.hyper,
            latency: self.search_latency()?,
            seed: self.config.seed,
            stream: Stream::ClientSearch,
        })
    }

    pub fn round_options(&self) -> RoundOptions {
        RoundOptions {
            rounds: self.config.search.rounds,
            normalization: Normalization::Participants,
            parallel: self.config.parallel,
            record_wall_clock: false,
        }
    }

    pub fn run_search(&self) -> Result<SearchOutcome> {
        run_fdnas(
            self.initial_model()?,
            &self.clients,
            &self.search_context()?,
            &self.round_options(),
        )
    }

    pub fn cluster_spec(&self) -> Result<ClusterSpec> {
        split_clusters(
            &self.clients,
            &self.config.cluster.key,
            self.config.cluster.rounds,
        )
    }

    pub fn group_runner(&self) -> GroupRunner<'_> {
        GroupRunner {
            clients: &self.clients,
            data: &self.data,
            config: &self.config.search.hyper,
            tables: &self.tables,
            seed: self.config.seed,
            global_size_aggregation: self.config.cluster.global_size_aggregation,
            parallel: self.config.parallel,
        }
    }

    pub fn retrain(&self, net: &NormalNet) -> Result<RetrainOutcome> {
        retrain_fedavg(
            net,
            &self.clients,
            &self.data,
            &self.config.retrain,
            self.config.seed,
            self.config.parallel,
        )
    }

    pub fn evaluate(&self, net: &NormalNet) -> Result<EvalReport> {
        evaluate(
            net,
            &self.clients,
            &self.data,
            self.config.retrain.finetune_epochs,
            &self.config.retrain,
            self.config.seed,
        )
    }

    pub fn net_artifact(&self, net: NormalNet) -> NetArtifact {
        NetArtifact {
            version: NET_ARTIFACT_VERSION,
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            net,
        }
    }
}
