//! Cluster-wise refinement: clients are grouped by tag or hardware, and each
//! group continues the search from the shared checkpoint on its own data.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ClusterKey;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::federation::{
    run_search_rounds, Client, MetricsRecord, Normalization, RoundOptions, SearchConfig,
    SearchContext, ServerState,
};
use crate::seeds::{stream_seed, Stream};
use crate::supernet::{derive_normal_net, LatencyTable, NormalNet, SuperNetModel};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterGroup {
    /// The shared key value (tag or hardware profile).
    pub key: String,
    pub clients: Vec<usize>,
    /// Hardware profile shared by every member, if any.
    pub hardware: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub groups: Vec<ClusterGroup>,
    pub rounds: usize,
}

impl ClusterSpec {
    /// Fails unless the groups are non-empty, disjoint and cover `ids`.
    pub fn check_partition(&self, ids: &[usize]) -> Result<()> {
        let mut seen = BTreeMap::new();
        for (g, group) in self.groups.iter().enumerate() {
            if group.clients.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "cluster group {g} is empty"
                )));
            }
            for &c in &group.clients {
                if seen.insert(c, g).is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "client {c} is in more than one group"
                    )));
                }
            }
        }
        let mut expected: Vec<usize> = ids.to_vec();
        expected.sort_unstable();
        let found: Vec<usize> = seen.keys().copied().collect();
        if found != expected {
            return Err(Error::InvalidArgument(format!(
                "groups cover clients {found:?}, expected {expected:?}"
            )));
        }
        Ok(())
    }
}

/// Groups clients by equal key value, ordered by smallest member id.
pub fn split_clusters(clients: &[Client], key: &ClusterKey, rounds: usize) -> Result<ClusterSpec> {
    let mut by_key: BTreeMap<&str, Vec<&Client>> = BTreeMap::new();
    for c in clients {
        let value = match key {
            ClusterKey::Tag => c.tag.as_str(),
            ClusterKey::Hardware => c.hardware.as_str(),
        };
        if value.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "client {} has no {key:?} value",
                c.id
            )));
        }
        by_key.entry(value).or_default().push(c);
    }
    let mut groups: Vec<ClusterGroup> = by_key
        .into_iter()
        .map(|(k, members)| {
            let hw = &members[0].hardware;
            let shared = !hw.is_empty() && members.iter().all(|m| &m.hardware == hw);
            let mut ids: Vec<usize> = members.iter().map(|m| m.id).collect();
            ids.sort_unstable();
            ClusterGroup {
                key: k.to_string(),
                clients: ids,
                hardware: shared.then(|| hw.clone()),
            }
        })
        .collect();
    groups.sort_by_key(|g| g.clients[0]);
    Ok(ClusterSpec { groups, rounds })
}

/// Reads `client_id,tag,hardware` rows into the matching clients. A header
/// line, blank lines and `#` comments are skipped.
pub fn apply_cluster_file(clients: &mut [Client], text: &str) -> Result<()> {
    let mut assigned = vec![false; clients.len()];
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("client_id") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |msg: &str| Error::InvalidArgument(format!("cluster spec line {}: {msg}", n + 1));
        if fields.len() != 3 {
            return Err(bad("expected client_id,tag,hardware"));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| bad("client_id is not an integer"))?;
        let pos = clients
            .iter()
            .position(|c| c.id == id)
            .ok_or_else(|| bad("unknown client"))?;
        if std::mem::replace(&mut assigned[pos], true) {
            return Err(bad("client listed twice"));
        }
        clients[pos].tag = fields[1].to_string();
        clients[pos].hardware = fields[2].to_string();
    }
    if let Some(pos) = assigned.iter().position(|a| !a) {
        return Err(Error::InvalidArgument(format!(
            "cluster spec has no row for client {}",
            clients[pos].id
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub group: usize,
    pub clients: Vec<usize>,
    pub hardware: Option<String>,
    pub state: ServerState,
    pub normal: NormalNet,
    pub history: Vec<MetricsRecord>,
}

/// Shared inputs of every group run.
#[derive(Clone, Copy)]
pub struct GroupRunner<'a> {
    pub clients: &'a [Client],
    pub data: &'a LabeledDataset,
    pub config: &'a SearchConfig,
    pub tables: &'a HashMap<String, LatencyTable>,
    pub seed: u64,
    pub global_size_aggregation: bool,
    pub parallel: bool,
}

impl GroupRunner<'_> {
    fn table(&self, group: &ClusterGroup) -> Result<Option<&LatencyTable>> {
        let Some(hw) = &group.hardware else {
            if self.config.latency_weight > 0.0 {
                return Err(Error::Latency(format!(
                    "group {:?} mixes hardware profiles; cannot bind a latency table",
                    group.clients
                )));
            }
            return Ok(None);
        };
        match self.tables.get(hw) {
            Some(t) => Ok(Some(t)),
            None if self.config.latency_weight > 0.0 => Err(Error::Latency(format!(
                "no latency table for hardware profile `{hw}`"
            ))),
            None => Ok(None),
        }
    }

    fn run_group(
        &self,
        index: usize,
        group: &ClusterGroup,
        start: ServerState,
        rounds: usize,
    ) -> Result<GroupResult> {
        let members: Vec<Client> = group
            .clients
            .iter()
            .map(|&id| {
                self.clients
                    .iter()
                    .find(|c| c.id == id)
                    .cloned()
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("group references unknown client {id}"))
                    })
            })
            .collect::<Result<_>>()?;
        let ctx = SearchContext {
            data: self.data,
            config: self.config,
            latency: self.table(group)?,
            seed: self.seed,
            stream: Stream::GroupSearch,
        };
        let normalization = if self.global_size_aggregation {
            Normalization::Fixed {
                total: self.clients.iter().map(Client::size).sum(),
            }
        } else {
            Normalization::Participants
        };
        let opts = RoundOptions {
            rounds,
            normalization,
            parallel: self.parallel,
            record_wall_clock: false,
        };
        let out = run_search_rounds(start, &members, &ctx, &opts)?;
        let normal = derive_normal_net(&out.state.model, &out.state.arch)?;
        Ok(GroupResult {
            group: index,
            clients: group.clients.clone(),
            hardware: group.hardware.clone(),
            state: out.state,
            normal,
            history: out.history,
        })
    }

    fn run_all<F>(&self, spec: &ClusterSpec, start: F) -> Result<Vec<GroupResult>>
    where
        F: Fn(usize, &ClusterGroup) -> ServerState + Sync,
    {
        let ids: Vec<usize> = self.clients.iter().map(|c| c.id).collect();
        spec.check_partition(&ids)?;
        let work = |(i, g): (usize, &ClusterGroup)| self.run_group(i, g, start(i, g), spec.rounds);
        let results: Vec<Result<GroupResult>> = if self.parallel {
            spec.groups.par_iter().enumerate().map(work).collect()
        } else {
            spec.groups.iter().enumerate().map(work).collect()
        };
        results.into_iter().collect()
    }

    /// Every group starts from `checkpoint` (weights, logits and its
    /// members' optimizer moments), with the round counter reset.
    pub fn run_cfdnas(
        &self,
        checkpoint: &ServerState,
        spec: &ClusterSpec,
    ) -> Result<Vec<GroupResult>> {
        checkpoint.validate()?;
        self.run_all(spec, |_, group| inherit(checkpoint, group))
    }

    /// Same loop from a fresh SuperNet per group.
    pub fn naive_group_search(
        &self,
        template: &SuperNetModel,
        spec: &ClusterSpec,
    ) -> Result<Vec<GroupResult>> {
        self.run_all(spec, |i, _| {
            let seed = stream_seed(self.seed, Stream::NaiveInit, i as u64, 0);
            ServerState::fresh(SuperNetModel::init(template.topology.clone(), seed))
        })
    }
}

/// Group starting state taken from the checkpoint.
pub fn inherit(checkpoint: &ServerState, group: &ClusterGroup) -> ServerState {
    ServerState {
        round: 0,
        model: checkpoint.model.clone(),
        arch: checkpoint.arch.clone(),
        optimizers: checkpoint
            .optimizers
            .iter()
            .filter(|(id, _)| group.clients.contains(id))
            .map(|(id, o)| (*id, o.clone()))
            .collect(),
    }
}
